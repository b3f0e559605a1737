"""
測試模組
Test Module
"""
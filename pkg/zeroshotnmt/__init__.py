"""
Package Version
"""
__version__ = '0.2.0'

"""Vendor-neutral Ethereum node observability toolkit."""

__version__ = "0.1.0"

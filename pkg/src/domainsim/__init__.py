"""domainsim: desk-scale intermediate-task transfer-learning lab."""

__version__ = "0.1.0"

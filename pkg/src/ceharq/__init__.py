"""CE-HARQ link-level simulator - compressed-error retransmissions against chase-combining HARQ."""

__version__ = "0.1.0"

"""Joint routing, spectrum and power allocation for multi-hop relay networks."""

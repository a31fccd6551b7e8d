"""Emergency-response management toolkit."""

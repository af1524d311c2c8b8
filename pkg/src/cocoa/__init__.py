"""Joint wavefront and structure estimation for widefield microscopy."""

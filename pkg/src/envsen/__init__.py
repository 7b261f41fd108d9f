"""Value-of-information communication policies for sensor networks tracking a wildfire."""

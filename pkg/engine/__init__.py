# Initialize engine package
# Initialize database package
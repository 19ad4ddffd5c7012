# Initialize models package
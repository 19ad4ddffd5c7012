# Initialize planning package
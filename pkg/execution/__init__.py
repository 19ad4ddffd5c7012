# Initialize execution package
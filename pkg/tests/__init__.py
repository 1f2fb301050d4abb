# Test package for crossgrain

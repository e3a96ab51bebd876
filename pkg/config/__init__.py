"""
Configuration for the unlimitd meta-learning package
"""

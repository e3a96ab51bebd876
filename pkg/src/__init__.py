"""
UnLiMiTD meta-learning package: GP priors over neural network functions
"""

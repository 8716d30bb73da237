"""
Integration tests: the command-line surface end to end, and theory versus
simulation agreement (marked slow).
"""

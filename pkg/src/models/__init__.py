"""
Statistical models: likelihood, penalties, posterior sampling, MCECM
fitting, tuning and top-scoring-pair screening.
"""

# Bayesian loss reserving workflow
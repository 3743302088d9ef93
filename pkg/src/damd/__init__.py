"""Sequential parameter estimation for stochastic ODEs by matching forecast
distributions from the CDF equation to Bayesian observational posteriors."""

__version__ = "0.1.0"

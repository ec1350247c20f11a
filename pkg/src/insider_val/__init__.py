"""Monetary value of inside information in complete-market models.

Modules
-------
mcsim        exact path simulation for the three worked markets
densities    signal laws and conditional density processes q^x_t
diagnostics  NFLVR verdicts, optimal arbitrage profit, martingale tests
dualopt      optimal consumption with a credit line by duality
valuation    utility indifference values and their universal bounds
replication  discretized universal strategy and numeraire portfolio
cli          the ``insider-val`` command
"""

__version__ = "0.1.0"

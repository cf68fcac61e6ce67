"""Backprop and predictive-coding gradient engines on chain networks."""

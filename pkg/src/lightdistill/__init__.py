"""lightdistill: spatiotemporally consistent HDR light-field estimation from
chrome-ball light probes, with the generative prior behind a pluggable oracle."""

__version__ = "0.1.0"

"""TFM-Bayes: regressão bayesiana por pixel de forças de tração celular."""

__version__ = "0.1.0"

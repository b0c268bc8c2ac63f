"""Water-table depth forecasting from weekly weather image series.

Two models share a time-distributed CNN encoder: ``tdc-lstm`` adds an LSTM
head, ``tdc-unpwavenet`` an unpadded dilated-convolution head with
channel-distributed skip cells.
"""
__version__ = "0.1.0"

"""Speech-emotion sequence classification with an attention CNN-BLSTM-DNN and a deep CNN baseline."""

__version__ = "0.1.0"

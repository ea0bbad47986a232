"""Federated DeepConv-QK-LSTM: kernel-gated LSTMs trained with FedAvg."""

__version__ = "0.1.0"

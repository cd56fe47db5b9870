"""Federated graph classification on multichannel time series.

Pipeline: recording -> per-epoch node features -> correlation graphs ->
mean-aggregation GNN trained with federated averaging over non-IID clients.
"""

__version__ = "0.1.0"

# DisenHCN: disentangled hypergraph convolution for spatiotemporal activity prediction
__version__ = "1.0.0"

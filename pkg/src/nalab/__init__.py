"""nalab: a desk-scale lab for comparing QKV projection mechanisms in
multi-head self-attention: standard linear maps, dual linear projections
(two linear layers around a LayerNorm), and MLP projections with a ReLU.
Ships its own taped autodiff core, deterministic training, and metric suite.
"""

__version__ = "0.1.0"

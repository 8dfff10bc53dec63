"""FedLay: decentralized overlay construction, maintenance, and model exchange.

Subpackages cover ring-coordinate geometry (`rings`), static topology math
(`graphs`), the neighbor discovery and maintenance protocols (`protocol`),
the discrete-event simulator (`sim`), the confidence-weighted model exchange
protocol (`exchange`), the toy decentralized-learning harness (`learning`),
and the experiment CLI (`cli`).
"""

__version__ = "0.1.0"

"""Decentralised resource control for P2P networks.

Fee-, proof-of-work-, coinage- and identity-based admission policies over a
simulated UTXO chain, a gossip network that enforces them node by node, and
an atomic name exchange built on top.
"""

__version__ = "0.1.0"

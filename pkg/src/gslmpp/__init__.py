"""Molecular property prediction with a learned molecule-level similarity graph.

Molecules are embedded by a GIN encoder, connected through an ECFP/Tanimoto
similarity graph, and that graph is refined jointly with the node
embeddings by metric-based structure learning before a linear head predicts
the target.
"""

__version__ = "0.1.0"

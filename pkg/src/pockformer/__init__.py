"""pockformer: pocket-ligand docking and pocket-aware molecule design with
a dual-channel (token + number) autoregressive transformer."""

__version__ = "0.1.0"

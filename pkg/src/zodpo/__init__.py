"""Zero-order distributed policy optimization for decentralized LQ control."""

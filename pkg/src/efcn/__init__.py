"""CNN-to-FCN embedding, relax-time training and loss-landscape probes."""

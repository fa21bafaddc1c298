"""Shared test configuration."""

import torch
from hypothesis import settings

# single-threaded torch keeps timings stable on small CPU boxes
torch.set_num_threads(1)

# first-use torch ops can be slow enough to trip the default deadline
settings.register_profile("e2po", deadline=None)
settings.load_profile("e2po")

"""Budget-aware benchmark harness for efficient-training methods.

Pre-trains a tiny masked-LM transformer under a fixed reference-system-time
budget and compares seven training regimes: plain AdamW, depth doubling,
stochastic layer dropping, loss-percentile batch admission, reducible-loss
batch selection, and the Lion and Sophia optimizers.
"""

__version__ = "0.1.0"

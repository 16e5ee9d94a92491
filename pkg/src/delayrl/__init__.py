"""delayrl: reinforcement learning under constant action delay.

Delay-wrapped environments, a hand-written numpy network kernel, a residual
state predictor, a delayed V-trace actor-critic, exact tabular oracles and an
experiment harness.
"""
__version__ = "0.1.0"

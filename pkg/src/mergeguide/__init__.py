"""Multi-turn PPO on Points24 guided by a teacher merged from the agent's own
training checkpoints."""

__version__ = "0.1.0"

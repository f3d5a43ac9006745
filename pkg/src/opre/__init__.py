"""Options as responses: grid games, OPRE agents, actor-learner training and meta-game analysis."""

__version__ = "0.1.0"

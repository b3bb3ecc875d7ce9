"""Satisfaction-aligned ranking from sparse in-feed questionnaires.

A hand-written autodiff core, a ranking model whose low-rank side pathway and
satisfaction head learn only from questionnaire answers, a synthetic feed
simulator with planted clickbait, and questionnaire-grounded evaluation.
"""

__version__ = "0.1.0"

"""neuropt: symbolic nonlinear programs with embedded learned models.

Subpackages: :mod:`neuropt.symgraph` (expression graphs and derivatives),
:mod:`neuropt.learned` (MLP weights, embedding, training),
:mod:`neuropt.nlpsolve` (interior-point solver), :mod:`neuropt.codegen`
(tape lowering and emission), :mod:`neuropt.cases` (the two case studies),
:mod:`neuropt.service` (HTTP API), and :mod:`neuropt.cli` (client).
"""

__version__ = "0.1.0"

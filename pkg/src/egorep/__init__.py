"""Self-supervised representation learning from egocentric interaction data.

Subpackages cover a small autodiff engine (:mod:`egorep.tensor`), neural
network layers and optimizers (:mod:`egorep.nn`), the dual-encoder sequence
model (:mod:`egorep.encoder`), training objectives (:mod:`egorep.objectives`),
synthetic data plus the on-disk containers (:mod:`egorep.data`), sensor
synchronization and movement labeling (:mod:`egorep.sync`), the training loop
(:mod:`egorep.trainer`), frozen-feature transfer tasks (:mod:`egorep.transfer`),
and the command line front end (:mod:`egorep.cli`).
"""

__version__ = "0.1.0"

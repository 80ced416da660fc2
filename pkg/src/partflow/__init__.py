"""partflow: parts, their hierarchy, and their dynamics from frame pairs.

Subpackages and modules:
    scenesim   synthetic datasets with exact motion ground truth
    netblocks  the model's network components
    structure  structural descriptor and hierarchy extraction
    training   losses, two-stage schedule, checkpoints
    evalkit    segmentation/hierarchy/sampling evaluation
    cli        command-line entry points
"""

__version__ = "0.1.0"

"""Class-incremental semantic segmentation with proposal classification,
label remodeling and unseen-class mining."""

__version__ = "0.1.0"

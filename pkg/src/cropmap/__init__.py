"""Ground-vehicle LiDAR mapping of crop canopy volume and biomass."""

__version__ = "0.1.0"

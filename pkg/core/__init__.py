# Numerical core: Gaussian-preserving flows on top of invertible base maps

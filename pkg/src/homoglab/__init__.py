"""homoglab: desk-scale workbench for quantitative homogenization of
almost-periodic second-order elliptic operators."""

__version__ = "0.1.0"

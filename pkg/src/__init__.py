"""Diffuse Optical Tomography with Interpolatory Model Reduction - Core Package"""

__version__ = "1.0.0"
__description__ = "Parametric level-set image reconstruction with reduced-order forward models"

"""
fgsmglm : estimation Generalized FGSM pour les modèles linéaires généralisés.
"""

__version__ = "1.0.0"

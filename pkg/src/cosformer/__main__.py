"""
Entry point for running COSFormer as a module: python -m cosformer
"""

from .cli import main

if __name__ == "__main__":
    main()

"""
Entry point for running active_segmenter as a module.

Usage:
    python -m active_segmenter run --config active_segmenter/configs/desk_scale.yaml
    python -m active_segmenter report --results results/desk_scale
"""

from .src.main import main

if __name__ == "__main__":
    main()

"""Top-down unsupervised semantic segmentation.

Mines sliding-window crop features with a small vision transformer,
clusters them into a concept bank, renders Grad-CAM style responses into
pixel pseudo labels, and trains a mask decoder on them with
teacher-student bootstrapping. Evaluation matches predicted clusters to
ground-truth classes with the Hungarian algorithm.
"""

__version__ = "0.1.0"

__all__ = ["TopDownSegmenter", "__version__"]


def __getattr__(name):
    # Lazy export so light-weight submodules can be imported without
    # pulling in torch through the estimator.
    if name == "TopDownSegmenter":
        from topdownseg.estimator import TopDownSegmenter

        return TopDownSegmenter
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")

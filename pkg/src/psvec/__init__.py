"""psvec: unsupervised patient-status-vector embeddings from multi-modal
ICU records, with a mortality/readmission evaluation harness."""

__version__ = "0.1.0"

from .metrics import auprc, auroc
from .records import Demographics, ICUStay, PatientRecord, VitalSample

__all__ = [
    "auprc",
    "auroc",
    "Demographics",
    "ICUStay",
    "PatientRecord",
    "VitalSample",
    "__version__",
]

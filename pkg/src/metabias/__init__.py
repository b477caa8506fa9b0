"""Publication-bias analysis with the Copas selection model.

Unadjusted random-effects meta-analysis, Copas-Shi sensitivity analysis and
a registry-informed full maximum-likelihood fit that uses the planned sample
sizes of unpublished studies, plus a simulation lab and a small CLI.
"""

from .dataset import MetaDataset, StudyRecord, load_bundled, parse_csv, two_by_two_effect

__version__ = "0.1.0"

__all__ = ["MetaDataset", "StudyRecord", "load_bundled", "parse_csv", "two_by_two_effect", "__version__"]

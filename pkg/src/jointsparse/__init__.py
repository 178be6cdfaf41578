"""Row-sparse nonconvex regression across treatment cohorts for covariate selection and effect estimation."""

__version__ = "0.1.0"

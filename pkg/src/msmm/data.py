"""Observed-data containers, model-specification terms, and CSV ingestion.

The estimation modules consume three things from here: a validated
:class:`Dataset` holding (Y, Z, M, X), an :class:`EffectSpec` describing
the model terms, and the design matrices built from the two.

Terms come from a closed vocabulary so that every basis function is zero
at (z=0, m=0) by construction:

* basis terms: ``Z``, ``M``, ``Z:M``, ``Z:<covariate>``, ``M:<covariate>``
* weight terms: ``Z``, ``Z:<covariate>`` (functions of treatment and
  covariates only, never of the mediator or outcome)
"""

import csv
import math
from dataclasses import dataclass

import numpy as np

from .exceptions import (
    IndexOutOfRange,
    MissingColumn,
    MissingValue,
    MsmmError,
    NegativeOutcome,
    NonIntegerOutcome,
)
from .validation import is_binary_treatment


@dataclass(frozen=True)
class Dataset:
    """Complete-case records of outcome, treatment, mediator and covariates.

    Parameters
    ----------
    outcome : array of shape (n,)
        Non-negative integer counts.
    treatment : array of shape (n,)
        Treatment levels; validated to {0, 1} with both arms present when
        ``binary_treatment`` is set.
    mediator : array of shape (n,)
        Continuous mediator values.
    covariates : array of shape (n, p)
        Numeric covariate columns. May have zero columns.
    covariate_names : tuple of str
        One name per covariate column.
    binary_treatment : bool
        Declares the two-arm 0/1 convention. Non-binary treatments are
        accepted by the data layer but rejected by the solver.
    n_dropped : int
        Rows removed by explicit listwise deletion at load time.
    """

    outcome: np.ndarray
    treatment: np.ndarray
    mediator: np.ndarray
    covariates: np.ndarray
    covariate_names: tuple = ()
    binary_treatment: bool = True
    n_dropped: int = 0

    def __post_init__(self):
        outcome = np.asarray(self.outcome)
        flt = outcome.astype(np.float64)
        if outcome.ndim != 1 or outcome.shape[0] < 1:
            raise MsmmError("outcome must be a non-empty vector")
        if not np.all(np.isfinite(flt)):
            raise MsmmError("outcome contains non-finite values")
        if np.any(flt != np.round(flt)):
            raise MsmmError("outcome must contain integers")
        if np.any(flt < 0):
            raise MsmmError("outcome must be non-negative")
        object.__setattr__(self, "outcome", flt.astype(np.int64))

        n = self.outcome.shape[0]
        treatment = np.asarray(self.treatment, dtype=np.float64)
        mediator = np.asarray(self.mediator, dtype=np.float64)
        covariates = np.asarray(self.covariates, dtype=np.float64)
        if covariates.size == 0:
            covariates = covariates.reshape(n, 0)
        if covariates.ndim == 1:
            covariates = covariates.reshape(-1, 1)
        if treatment.shape != (n,) or mediator.shape != (n,):
            raise MsmmError("treatment and mediator must have one entry per record")
        if covariates.shape[0] != n:
            raise MsmmError("covariates must have one row per record")
        for name, arr in (("treatment", treatment), ("mediator", mediator),
                          ("covariates", covariates)):
            if not np.all(np.isfinite(arr)):
                raise MsmmError(f"{name} contains non-finite values")
        names = tuple(self.covariate_names)
        if not names:
            names = tuple(f"x{j + 1}" for j in range(covariates.shape[1]))
        if len(names) != covariates.shape[1]:
            raise MsmmError("covariate_names must match the number of columns")
        if self.binary_treatment and not is_binary_treatment(treatment):
            raise MsmmError(
                "binary treatment declared but levels are not {0,1} with both arms present"
            )
        for arr in (self.outcome, treatment, mediator, covariates):
            arr.flags.writeable = False
        object.__setattr__(self, "treatment", treatment)
        object.__setattr__(self, "mediator", mediator)
        object.__setattr__(self, "covariates", covariates)
        object.__setattr__(self, "covariate_names", names)

    @property
    def n(self):
        return self.outcome.shape[0]

    @property
    def p(self):
        return self.covariates.shape[1]

    def covariate_index(self, name):
        try:
            return self.covariate_names.index(name)
        except ValueError:
            raise MissingColumn(name) from None


_BASIS_KINDS = ("Z", "M", "Z:M", "Z:x", "M:x")
_WEIGHT_KINDS = ("Z", "Z:x")


@dataclass(frozen=True)
class BasisTerm:
    """One known effect function h(z, m, x) from the closed vocabulary.

    All kinds evaluate to zero at (z=0, m=0) regardless of x.
    """

    kind: str
    covariate: int = None
    label: str = ""

    def __post_init__(self):
        if self.kind not in _BASIS_KINDS:
            raise MsmmError(f"unknown basis term kind {self.kind!r}")
        needs_cov = self.kind in ("Z:x", "M:x")
        if needs_cov and (self.covariate is None or self.covariate < 0):
            raise MsmmError(f"basis term {self.kind!r} requires a covariate index")
        if not needs_cov and self.covariate is not None:
            raise MsmmError(f"basis term {self.kind!r} takes no covariate index")
        if not self.label:
            label = self.kind.replace("x", f"x{(self.covariate or 0) + 1}") \
                if needs_cov else self.kind
            object.__setattr__(self, "label", label)

    def evaluate(self, z, m, x):
        """Vectorized h(z, m, x); ``x`` is the (n, p) covariate block."""
        z = np.asarray(z, dtype=np.float64)
        m = np.asarray(m, dtype=np.float64)
        if self.kind == "Z":
            return z
        if self.kind == "M":
            return m
        if self.kind == "Z:M":
            return z * m
        x = np.asarray(x, dtype=np.float64)
        if self.covariate >= x.shape[1]:
            raise IndexOutOfRange(
                f"term {self.label!r} references covariate {self.covariate}, "
                f"data has {x.shape[1]}"
            )
        col = x[:, self.covariate] if x.ndim == 2 else x[self.covariate]
        return (z if self.kind == "Z:x" else m) * col


@dataclass(frozen=True)
class WeightTerm:
    """One weighting function of (z, x) only; the mediator never enters."""

    kind: str
    covariate: int = None
    label: str = ""

    def __post_init__(self):
        if self.kind not in _WEIGHT_KINDS:
            raise MsmmError(f"unknown weight term kind {self.kind!r}")
        if self.kind == "Z:x" and (self.covariate is None or self.covariate < 0):
            raise MsmmError("weight term 'Z:x' requires a covariate index")
        if self.kind == "Z" and self.covariate is not None:
            raise MsmmError("weight term 'Z' takes no covariate index")
        if not self.label:
            label = f"Z:x{self.covariate + 1}" if self.kind == "Z:x" else "Z"
            object.__setattr__(self, "label", label)

    def evaluate(self, z, x):
        return np.asarray(z, dtype=np.float64) * self.factor(x)

    def factor(self, x):
        """The f(x) part of the multiplicative form z * f(x)."""
        if self.kind == "Z":
            return np.ones(np.asarray(x).shape[0] if np.ndim(x) == 2 else 1)
        x = np.asarray(x, dtype=np.float64)
        if self.covariate >= x.shape[1]:
            raise IndexOutOfRange(
                f"term {self.label!r} references covariate {self.covariate}, "
                f"data has {x.shape[1]}"
            )
        return x[:, self.covariate]


@dataclass(frozen=True)
class AugmentationSpec:
    """Covariates of the efficiency working model exp(x' beta)."""

    covariates: tuple = ()
    intercept: bool = True

    def design(self, data):
        cols = []
        if self.intercept:
            cols.append(np.ones(data.n))
        for j in self.covariates:
            if j < 0 or j >= data.p:
                raise IndexOutOfRange(
                    f"augmentation references covariate {j}, data has {data.p}"
                )
            cols.append(data.covariates[:, j])
        if not cols:
            raise MsmmError("augmentation needs an intercept or at least one covariate")
        return np.column_stack(cols)


@dataclass(frozen=True)
class EffectSpec:
    """Basis terms, weight terms and optional augmentation for one model.

    Requires at least as many weight terms as basis terms (just- or
    over-identified) and no duplicate terms on either side.
    """

    basis: tuple
    weights: tuple
    augmentation: AugmentationSpec = None

    def __post_init__(self):
        basis = tuple(self.basis)
        weights = tuple(self.weights)
        if len(basis) < 1:
            raise MsmmError("at least one basis term is required")
        if len(weights) < len(basis):
            raise MsmmError(
                f"need at least as many weight terms ({len(weights)}) "
                f"as basis terms ({len(basis)})"
            )
        if len({(t.kind, t.covariate) for t in basis}) != len(basis):
            raise MsmmError("duplicate basis terms")
        if len({(t.kind, t.covariate) for t in weights}) != len(weights):
            raise MsmmError("duplicate weight terms")
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "weights", weights)

    @property
    def n_basis(self):
        return len(self.basis)

    @property
    def n_weights(self):
        return len(self.weights)

    def basis_labels(self):
        return tuple(t.label for t in self.basis)


def _parse_term(text, covariate_names, weight=False):
    text = text.strip()
    if not text:
        raise MsmmError("empty term in specification string")
    parts = text.split(":")
    if len(parts) == 1:
        head = parts[0].upper()
        if head == "Z":
            return WeightTerm("Z") if weight else BasisTerm("Z")
        if head == "M" and not weight:
            return BasisTerm("M")
        raise MsmmError(f"unknown term {text!r}")
    if len(parts) == 2:
        head, tail = parts[0].upper(), parts[1].strip()
        if head == "Z" and tail.upper() == "M" and not weight:
            return BasisTerm("Z:M")
        if tail not in covariate_names:
            raise MissingColumn(tail)
        j = covariate_names.index(tail)
        if head == "Z":
            kind = "Z:x"
            cls = WeightTerm if weight else BasisTerm
            return cls(kind, covariate=j, label=f"Z:{tail}")
        if head == "M" and not weight:
            return BasisTerm("M:x", covariate=j, label=f"M:{tail}")
    raise MsmmError(f"unknown term {text!r}")


def parse_basis(text, covariate_names):
    """Parse a comma-separated basis string such as ``"Z,M,Z:x1"``."""
    return tuple(_parse_term(t, list(covariate_names)) for t in text.split(","))


def parse_weights(text, covariate_names):
    """Parse a comma-separated weight string such as ``"Z,Z:x1"``."""
    return tuple(
        _parse_term(t, list(covariate_names), weight=True) for t in text.split(",")
    )


def build_basis_matrix(spec, data):
    """Evaluate every basis term on every record, giving the n x K matrix H."""
    cols = [term.evaluate(data.treatment, data.mediator, data.covariates)
            for term in spec.basis]
    return np.column_stack(cols)


def build_weight_matrix(spec, data):
    """Evaluate every weight term on every record, giving the n x L matrix A.

    The result is uncentered; conditional-mean centering is a separate step.
    """
    cols = [term.evaluate(data.treatment, data.covariates) for term in spec.weights]
    return np.column_stack(cols)


def weight_factor_matrix(spec, data):
    """The f(x) factors of each weight term, i.e. the weight matrix at z = 1."""
    cols = [np.broadcast_to(term.factor(data.covariates), (data.n,)).astype(np.float64)
            for term in spec.weights]
    return np.column_stack(cols)


@dataclass(frozen=True)
class ColumnSchema:
    """Maps CSV header names onto the dataset roles.

    ``covariates=None`` takes every column not otherwise mapped, in header
    order.
    """

    outcome: str = "y"
    treatment: str = "z"
    mediator: str = "m"
    covariates: tuple = None


def _parse_cell(text, row, column):
    text = text.strip()
    if text == "" or text.upper() in ("NA", "NAN"):
        raise MissingValue(row, column)
    try:
        value = float(text)
    except ValueError:
        raise MsmmError(
            f"cannot parse {text!r} at data row {row}, column {column!r}"
        ) from None
    if math.isnan(value):
        raise MissingValue(row, column)
    return value


def load_csv(path, schema=None, drop_incomplete=False, binary_treatment=True):
    """Read a comma-separated file with a header row into a Dataset.

    Rows are numbered from 1 (first data row after the header) in error
    messages. With ``drop_incomplete``, rows containing missing cells are
    removed and counted in ``Dataset.n_dropped``; otherwise the first
    missing cell is an error.
    """
    if schema is None:
        schema = ColumnSchema()
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise MsmmError(f"{path}: empty file, header row required") from None
        header = [h.strip() for h in header]
        for role in (schema.outcome, schema.treatment, schema.mediator):
            if role not in header:
                raise MissingColumn(role)
        if schema.covariates is None:
            used = {schema.outcome, schema.treatment, schema.mediator}
            covariate_names = tuple(h for h in header if h not in used)
        else:
            covariate_names = tuple(schema.covariates)
            for name in covariate_names:
                if name not in header:
                    raise MissingColumn(name)
        index = {name: header.index(name) for name in header}
        wanted = [schema.outcome, schema.treatment, schema.mediator,
                  *covariate_names]

        rows = []
        n_dropped = 0
        for row_number, record in enumerate(reader, start=1):
            if not record or all(cell.strip() == "" for cell in record):
                continue
            try:
                values = []
                for name in wanted:
                    if index[name] >= len(record):
                        raise MissingValue(row_number, name)
                    values.append(_parse_cell(record[index[name]], row_number, name))
            except MissingValue:
                if drop_incomplete:
                    n_dropped += 1
                    continue
                raise
            y = values[0]
            if y != round(y):
                raise NonIntegerOutcome(row_number, record[index[schema.outcome]])
            if y < 0:
                raise NegativeOutcome(row_number, record[index[schema.outcome]])
            rows.append(values)

    if not rows:
        raise MsmmError(f"{path}: no data rows")
    table = np.asarray(rows, dtype=np.float64)
    return Dataset(
        outcome=table[:, 0].astype(np.int64),
        treatment=table[:, 1],
        mediator=table[:, 2],
        covariates=table[:, 3:],
        covariate_names=covariate_names,
        binary_treatment=binary_treatment,
        n_dropped=n_dropped,
    )


def write_csv(data, path, schema=None):
    """Write a Dataset back to CSV with exact float round-trip formatting."""
    if schema is None:
        schema = ColumnSchema()
    header = [schema.outcome, schema.treatment, schema.mediator,
              *data.covariate_names]
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        for i in range(data.n):
            row = [str(int(data.outcome[i])),
                   repr(float(data.treatment[i])),
                   repr(float(data.mediator[i]))]
            row.extend(repr(float(v)) for v in data.covariates[i])
            writer.writerow(row)

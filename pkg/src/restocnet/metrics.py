"""Memory-compression arithmetic and accuracy reporting."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

FULL_PRECISION_BITS = 32
# Reported width of a {-1, +1} kernel weight; storage itself packs one bit.
BINARY_KERNEL_BITS = 2
BINARY_SYNAPSE_BITS = 1


@dataclass(frozen=True)
class MemoryDescriptor:
    """``count`` synapse groups of ``size`` weights, each ``bits`` wide."""
    count: int
    size: int
    bits: int

    def __post_init__(self):
        for name in ("count", "size", "bits"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value <= 0:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")

    @property
    def total_bits(self) -> int:
        return int(self.count) * int(self.size) * int(self.bits)


@dataclass(frozen=True)
class CompressionReport:
    baseline: MemoryDescriptor
    subject: MemoryDescriptor
    ratio: Fraction

    @property
    def value(self) -> float:
        return float(self.ratio)

    def display(self) -> str:
        """One decimal, truncated toward zero (e.g. 21.78 -> "21.7")."""
        tenths = math.floor(self.ratio * 10)
        return f"{tenths // 10}.{tenths % 10}"

    def text(self) -> str:
        return (f"baseline {self.baseline.total_bits} bits / subject {self.subject.total_bits} bits"
                f" = {self.ratio} ({self.display()}x)")

    def csv_row(self) -> list:
        b, s = self.baseline, self.subject
        return [b.count, b.size, b.bits, s.count, s.size, s.bits,
                self.ratio.numerator, self.ratio.denominator, self.display()]


CSV_HEADER = ["baseline_count", "baseline_size", "baseline_bits", "subject_count",
              "subject_size", "subject_bits", "ratio_num", "ratio_den", "ratio"]


def compression(baseline: MemoryDescriptor, subject: MemoryDescriptor) -> CompressionReport:
    return CompressionReport(baseline, subject, Fraction(baseline.total_bits, subject.total_bits))


def kernel_compression(baseline_kernels: int, baseline_k: int, subject_kernels: int, subject_k: int,
                       baseline_bits: int = FULL_PRECISION_BITS,
                       subject_bits: int = BINARY_KERNEL_BITS) -> CompressionReport:
    """Kernel-bank storage ratio: (N_b k_b^2 bits_b) / (N_s k_s^2 bits_s)."""
    return compression(MemoryDescriptor(baseline_kernels, baseline_k * baseline_k, baseline_bits),
                       MemoryDescriptor(subject_kernels, subject_k * subject_k, subject_bits))


def synaptic_compression(baseline_neurons: int, subject_neurons: int, input_neurons: int = 784,
                         baseline_bits: int = FULL_PRECISION_BITS,
                         subject_bits: int = BINARY_SYNAPSE_BITS) -> CompressionReport:
    """Fully-connected synapse storage ratio for a shared input layer."""
    return compression(MemoryDescriptor(baseline_neurons, input_neurons, baseline_bits),
                       MemoryDescriptor(subject_neurons, input_neurons, subject_bits))


@dataclass
class AccuracyReport:
    accuracy: float
    confusion: np.ndarray  # rows: true class, columns: predicted class

    @property
    def total(self) -> int:
        return int(self.confusion.sum())


def evaluate_accuracy(predictions, labels, n_classes: int = 10) -> AccuracyReport:
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape:
        raise ValueError(f"length mismatch: {predictions.shape} vs {labels.shape}")
    if len(labels) == 0:
        raise ValueError("no samples to evaluate")
    for arr in (predictions, labels):
        if arr.min() < 0 or arr.max() >= n_classes:
            raise ValueError(f"class ids must lie in [0, {n_classes})")
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (labels, predictions), 1)
    return AccuracyReport(float(np.trace(confusion)) / len(labels), confusion)

#!/usr/bin/env python3
# Minimal dense-tensor engine with reverse-mode differentiation
from pycoalition.autodiff.tensor import Tensor, Function, ComputationRecord, backward, active_record
from pycoalition.autodiff.gradcheck import grad_check

__all__ = ["Tensor", "Function", "ComputationRecord", "backward", "active_record", "grad_check"]

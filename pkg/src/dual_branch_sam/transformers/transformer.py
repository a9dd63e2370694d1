import logging

import numpy as np
import sympy as sp

from dual_branch_sam.exceptions import ConfigurationError

logger = logging.getLogger(__name__)


class IntensityTransformer:
    """
    Applies a voxel-wise intensity formula before volumes are rescaled.

    The formula is a sympy expression in the single symbol ``x`` (the raw
    voxel value), for example::

        log(x + 1)
        Piecewise((0, x < -160), (x + 160, x < 240), (400, True))

    A formula without ``x`` (e.g. ``42``) is a constant and is broadcast to
    the input shape.

    Methods
    -------
    transform(values)
        Evaluates the formula on an array of voxel values.
    """

    SYMBOL = "x"

    def __init__(self, formula: str):
        """
        Parameters
        ----------
        formula : str
            Expression in ``x``.

        Raises
        ------
        ConfigurationError
            If the formula does not parse or uses symbols other than ``x``.
        """
        self.formula = str(formula)
        self.expression = self._validate_formula(self.formula)
        self.symbol = sp.Symbol(self.SYMBOL)
        self.lambdified = sp.lambdify([self.symbol], self.expression, modules="numpy")
        logger.debug(f"Intensity formula: {self.expression}")

    def _validate_formula(self, formula: str) -> sp.Expr:
        try:
            expression = sp.sympify(formula)
        except (sp.SympifyError, TypeError, SyntaxError) as e:
            raise ConfigurationError(f"Invalid formula: {formula}: {e}")
        extra = sorted(str(s) for s in expression.free_symbols if str(s) != self.SYMBOL)
        if extra:
            raise ConfigurationError(f"Formula {formula} uses unknown symbols {extra}; only '{self.SYMBOL}' is allowed")
        return expression

    def transform(self, values: np.ndarray) -> np.ndarray:
        """
        Parameters
        ----------
        values : np.ndarray
            Raw voxel values, any shape.

        Returns
        -------
        np.ndarray
            float64 array of the same shape.
        """
        values = np.asarray(values, dtype=np.float64)
        try:
            result = self.lambdified(values)
        except Exception as e:
            logger.error(f"Error transforming with {self.formula}: {e}")
            raise
        return np.broadcast_to(np.asarray(result, dtype=np.float64), values.shape).copy()

    def __repr__(self):
        return f"IntensityTransformer({self.formula!r})"

"""Equality checks with failure reasons for metric tables and models."""

import numpy as np


def compare_dfs(df1, df2):
    """Raise descriptive exception if dataframes are not equal, compared column by column."""
    if df1.equals(df2):
        return True

    assert list(df1.columns) == list(df2.columns), f"Columns differ: {list(df1.columns)} != {list(df2.columns)}"

    assert len(df1) == len(df2), f"Row counts differ: {len(df1)} != {len(df2)}"

    for col in df1.columns:
        assert df1[col].equals(df2[col]), f"Column {col} is not equal."

    return True


def compare_models(model1, model2, names=None):
    """Raise descriptive exception if two models differ in any parameter or quantized weights.

    Parameters
    ----------
    model1 (Model) : first model
    model2 (Model) : second model
    names (set, default=None) : parameter names to compare, all if None
    """
    assert model1.spec == model2.spec, f"Network specs differ: {model1.spec.role} != {model2.spec.role}"

    for index, (a, b) in enumerate(zip(model1.layers, model2.layers)):
        assert a.quant == b.quant, f"Layer {index} quantization differs."
        for name in a.params:
            if names is not None and name not in names:
                continue
            assert np.array_equal(a.params[name], b.params[name]), f"Layer {index} parameter {name} is not equal."

    return True

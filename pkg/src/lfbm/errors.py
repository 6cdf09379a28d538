"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericFailure -> 4. ContractError signals a programming mistake (bad shapes,
violated preconditions) and is not meant to be caught.
"""


class LFBMError(Exception):
    pass


class ContractError(LFBMError, ValueError):
    pass


class ConfigError(LFBMError):
    pass


class DataError(LFBMError):
    pass


class NumericFailure(LFBMError, FloatingPointError):
    """Non-finite values appeared in a computation.

    ``where`` names the operation or iteration that produced them and
    ``step`` carries a Langevin step / training iteration index when known.
    """

    def __init__(self, where, step=None, detail=""):
        self.where = where
        self.step = step
        self.detail = detail
        msg = f"non-finite values in {where}"
        if step is not None:
            msg += f" at step {step}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)

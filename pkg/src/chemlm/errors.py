"""Exception hierarchy shared across the package.

Each error carries an ``exit_code`` used by the command-line front end:
1 for I/O problems, 2 for validation failures, 3 for numeric aborts.
"""


class ChemLMError(Exception):
    exit_code = 2


class ValidationError(ChemLMError):
    exit_code = 2


class NumericError(ChemLMError):
    exit_code = 3


# tokenizer
class EmptyInput(ValidationError):
    def __init__(self):
        super().__init__("empty SMILES string")


class UnlexableCharacter(ValidationError):
    def __init__(self, smiles: str, position: int):
        self.smiles = smiles
        self.position = position
        super().__init__(
            f"no token matches {smiles[position]!r} at position {position} in {smiles!r}"
        )


class NoValidLines(ValidationError):
    def __init__(self, skipped: int = 0):
        self.skipped = skipped
        super().__init__(f"corpus has no tokenizable lines ({skipped} skipped)")


class TooLong(ValidationError):
    def __init__(self, length: int, limit: int = 202):
        self.length = length
        super().__init__(f"framed length {length} exceeds the {limit}-token cap")


class UnknownId(ValidationError):
    def __init__(self, token_id: int, size: int):
        self.token_id = token_id
        super().__init__(f"token id {token_id} outside vocabulary of size {size}")


# dataset
class OutOfRange(ValidationError):
    pass


class DegenerateVocab(ValidationError):
    pass


# nncore
class NonFiniteValue(NumericError):
    pass


class EmptyLossMask(ValidationError):
    pass


class DetachedTensor(ChemLMError):
    pass


# attention / model
class OddHeadDim(ValidationError):
    pass


class AllMasked(ValidationError):
    pass


class SequenceTooLongForAnalysis(ValidationError):
    pass


class PositionOverflow(ValidationError):
    pass


class IdOverflow(ValidationError):
    pass


class DimMismatch(ValidationError):
    pass


class CheckpointFormatError(ValidationError):
    pass


# train
class NonFiniteGradient(NumericError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"non-finite gradient in parameter {name!r}")


class LabelParse(ValidationError):
    pass


class EmptySplit(ValidationError):
    pass


class SingleClass(ValidationError):
    pass


# analysis
class NoAlignedMolecules(ValidationError):
    pass


class DegeneratePairs(ValidationError):
    pass


class HashConfigMismatch(ValidationError):
    pass


class ConfigError(ValidationError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration: " + "; ".join(self.problems))

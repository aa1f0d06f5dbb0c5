"""
Exception hierarchy shared by every stage of the screening engine
"""


class ScreeningError(Exception):
    pass


class StructureError(ScreeningError):
    pass


class ParseError(ScreeningError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConfigError(ScreeningError):
    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


class PotentialError(ScreeningError):
    pass


class TrainingError(ScreeningError):
    def __init__(self, message, frame_index=None, cycle=None):
        self.frame_index = frame_index
        self.cycle = cycle
        if frame_index is not None:
            message = f"{message} (frame {frame_index})"
        if cycle is not None:
            message = f"cycle {cycle}: {message}"
        super().__init__(message)


class RelaxationError(ScreeningError):
    def __init__(self, message, step=None):
        self.step = step
        if step is not None:
            message = f"{message} at step {step}"
        super().__init__(message)


class PhononError(ScreeningError):
    def __init__(self, message, qpoints=None):
        self.qpoints = [] if qpoints is None else [tuple(float(x) for x in q) for q in qpoints]
        super().__init__(message)


class QHABoundaryError(ScreeningError):
    def __init__(self, message, volume=None):
        self.volume = volume
        super().__init__(message)


class MechanicsError(ScreeningError):
    pass


class MDError(ScreeningError):
    def __init__(self, message, step=None):
        self.step = step
        if step is not None:
            message = f"{message} at step {step}"
        super().__init__(message)


class GenerationError(ScreeningError):
    def __init__(self, message, acceptance_rate=None):
        self.acceptance_rate = acceptance_rate
        super().__init__(message)


class SubstitutionError(ScreeningError):
    pass


class CampaignError(ScreeningError):
    pass


class CostModelError(ScreeningError):
    pass

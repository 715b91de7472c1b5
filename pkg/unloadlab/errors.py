"""
Exception hierarchy for unloadlab.

Every error carries a distinct exit_code so the command line front end
can map a failure in any stage to its own nonzero status.
"""

class UnloadLabError(Exception):
    """Root of all unloadlab errors"""
    exit_code = 1

#Mesh and file handling
class ParseError(UnloadLabError, ValueError):
    exit_code = 10

class TopologyError(UnloadLabError, ValueError):
    exit_code = 11

class IoError(UnloadLabError, IOError):
    exit_code = 12

class AmbiguousTopology(UnloadLabError, ValueError):
    exit_code = 13

class MissingLabel(UnloadLabError, ValueError):
    exit_code = 14

class DegenerateMesh(UnloadLabError, ValueError):
    exit_code = 15

#Fiber field
class SolverError(UnloadLabError, RuntimeError):
    exit_code = 20

class DegenerateGradient(UnloadLabError, RuntimeError):
    exit_code = 21

class PoleDegeneracy(UnloadLabError, RuntimeError):
    exit_code = 22

#Mechanics
class InvertedElement(UnloadLabError, RuntimeError):
    exit_code = 30

    def __init__(self, message, elements=None):
        UnloadLabError.__init__(self, message)
        self.elements = [] if elements is None else list(elements)

class StrainEnergyOverflow(UnloadLabError, ArithmeticError):
    """Fung exponent left the physically meaningful range"""
    exit_code = 31

class NonConvergence(UnloadLabError, RuntimeError):
    exit_code = 32

    def __init__(self, message, report=None):
        UnloadLabError.__init__(self, message)
        self.report = report

#Dataset generation
class MissingModeFile(UnloadLabError, IOError):
    exit_code = 40

class ResolutionError(UnloadLabError, ValueError):
    exit_code = 41

class TooFewShapes(UnloadLabError, ValueError):
    exit_code = 42

class ValueNotInGrid(UnloadLabError, ValueError):
    exit_code = 43

#Differentiable kernel and network
class ShapeMismatch(UnloadLabError, ValueError):
    exit_code = 50

class NotScalar(UnloadLabError, ValueError):
    exit_code = 51

class IsolatedNode(UnloadLabError, ValueError):
    exit_code = 52

class NonFiniteActivation(UnloadLabError, RuntimeError):
    exit_code = 53

#Training
class EmptySplit(UnloadLabError, ValueError):
    exit_code = 60

class NonFiniteGradient(UnloadLabError, RuntimeError):
    exit_code = 61

#Evaluation
class CorrespondenceMismatch(UnloadLabError, ValueError):
    exit_code = 70

class InsufficientData(UnloadLabError, ValueError):
    exit_code = 71

class EmptyTestSet(UnloadLabError, ValueError):
    exit_code = 72

class UnknownVariant(UnloadLabError, ValueError):
    exit_code = 73

#Run configuration
class ConfigError(UnloadLabError, ValueError):
    exit_code = 80

# -*- coding: utf-8 -*-

"""
Exceptions raised by the toolbox. Each one derives from the builtin that would
otherwise be raised for the same condition, so callers may catch either.
"""


class DimensionError(ValueError):
    """ Array shapes are incompatible or violate a divisibility precondition """


class LabelError(ValueError):
    """ A label map contains an id outside [0, C) that is not the ignore id """


class EmptyClassesError(ValueError):
    """ A label map has no pixel with a trainable (non-ignored) class id """


class ScheduleRangeError(ValueError):
    """ An iteration index lies outside the learning rate schedule """


class PairingError(ValueError):
    """ Day and night images of a batch do not form pairs """


class EmptyEvaluationError(ValueError):
    """ A confusion matrix without any counted pixel was asked for scores """


class DataError(IOError):
    """ Input data is missing or empty """


class OverwriteError(IOError):
    """ Refusing to write into an existing, non-empty output location """


class CheckpointError(IOError):
    """ A checkpoint cannot be used with the current configuration """


class IntegrityError(CheckpointError):
    """ The checksum of a checkpoint payload does not match its manifest """

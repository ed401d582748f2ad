import logging

from misc import TomographyException

logger = logging.getLogger(__name__)


class SamplingException(TomographyException):
    pass


class NonPositiveShotNoiseException(SamplingException):
    pass


class TraceFormatException(SamplingException):
    pass


class TraceSource(object):
    """
    This is an object that represents a source of measured traces.
    A source provides one MeasuredTrace per sweep configuration; it may
    synthesize them or read them from disk.
    """

    def read(self, config):
        """
        :param config: SweepConfiguration of the trace to provide
        :return: the MeasuredTrace acquired under this configuration
        """
        raise NotImplementedError

    def available(self):
        """
        :return: labels of the configurations this source can provide, None if any
        """
        return None

    def close(self):
        """
        clean-up
        """
        pass

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.close()

__name__ = "mixsur"
__version__ = "0.1.0.dev1"
__description__ = "Mixtures of seemingly unrelated regressions"
__url__ = ""
__author__ = "mixsur developers"
__author_email__ = ""

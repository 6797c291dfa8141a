import logging

PACKAGE_NAME = "av-colearn"

_FORMAT = "%(asctime)s %(levelname)-8s %(name)s: %(message)s"


def get_logger(name: str) -> logging.Logger:
    name = name.replace("_", "-").rsplit(".", 1)[-1]

    if name.startswith(PACKAGE_NAME):
        return logging.getLogger(name)
    return logging.getLogger(f"{PACKAGE_NAME}.{name}")


# Only the command line entry point calls this. Library modules never add handlers.
def configure_logging(verbosity: int = 0) -> None:
    level = logging.WARNING
    if verbosity == 1:
        level = logging.INFO
    elif verbosity >= 2:
        level = logging.DEBUG

    root = logging.getLogger(PACKAGE_NAME)
    root.setLevel(level)
    if not root.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(_FORMAT))
        root.addHandler(handler)

"""
Base node class for the cloth reconstruction and manipulation pipelines.
"""
from pocketflow import Node

from src.utils.errors import ClothError
from src.utils.logger import logger


class BaseNode(Node):
    """
    pocketflow Node that logs its stage and turns failures into
    shared["error"].

    Once an earlier node has recorded an error every later node is skipped,
    so a flow always runs to its end and the caller inspects shared["error"].
    """

    def __init__(self, max_retries=1, wait=0):
        """
        Initialize the node.

        Args:
            max_retries (int): Attempts of `exec` before giving up
            wait (float): Seconds between attempts
        """
        super().__init__(max_retries=max_retries, wait=wait)
        self.node_name = self.__class__.__name__
        logger.debug(f"{self.node_name} initialized")

    def _run(self, shared):
        if "error" in shared:
            logger.debug(f"{self.node_name} skipped after earlier error")
            return None
        logger.debug(f"{self.node_name} starting run")
        try:
            action = super()._run(shared)
        except ClothError as e:
            logger.error(f"{self.node_name} failed: {e}")
            shared["error"] = f"{self.node_name}: {e}"
            return None
        except Exception as e:
            logger.exception(f"Unexpected error in {self.node_name}: {str(e)}")
            shared["error"] = f"{self.node_name} error: {str(e)}"
            return None
        logger.debug(f"{self.node_name} completed successfully")
        return action

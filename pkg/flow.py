"""
Flow factories: one pocketflow Flow per command. Every flow starts by
resolving the configuration; nodes pass results through the shared dict.
"""
from pocketflow import Flow

from src.nodes.build_query_node import BuildQueryNode
from src.nodes.evaluate_node import EvaluateNode
from src.nodes.finetune_node import FinetuneNode
from src.nodes.generate_data_node import GenerateDataNode
from src.nodes.gradcheck_node import GradCheckNode
from src.nodes.load_checkpoint_node import LoadCheckpointNode
from src.nodes.load_config_node import LoadConfigNode
from src.nodes.load_dataset_node import LoadDatasetNode
from src.nodes.manipulate_node import ManipulateNode
from src.nodes.reconstruct_node import ReconstructNode
from src.nodes.train_node import TrainNode


def _chain(*nodes):
    for current, following in zip(nodes, nodes[1:]):
        current >> following
    return Flow(start=nodes[0])


def create_gen_data_flow():
    return _chain(LoadConfigNode(), GenerateDataNode())


def create_train_flow():
    return _chain(LoadConfigNode(), LoadDatasetNode(), TrainNode())


def create_eval_flow():
    return _chain(LoadConfigNode(), LoadDatasetNode(), LoadCheckpointNode(), EvaluateNode())


def create_reconstruct_flow():
    return _chain(LoadConfigNode(), LoadCheckpointNode(), ReconstructNode())


def create_finetune_flow():
    return _chain(LoadConfigNode(), LoadDatasetNode(), LoadCheckpointNode(), FinetuneNode())


def create_build_query_flow():
    return _chain(LoadConfigNode(), BuildQueryNode())


def create_manipulate_flow(build_query=False):
    """
    Args:
        build_query (bool): Rank group pairs in this run instead of loading a saved query list
    """
    nodes = [LoadConfigNode(), LoadCheckpointNode()]
    if build_query:
        nodes.append(BuildQueryNode())
    nodes.append(ManipulateNode())
    return _chain(*nodes)


def create_gradcheck_flow():
    return _chain(LoadConfigNode(), GradCheckNode())

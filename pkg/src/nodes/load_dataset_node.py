"""
Load Dataset Node: reads a generated dataset directory.
"""
from src.nodes.base_node import BaseNode
from src.utils.dataset_io import load_dataset
from src.utils.errors import FormatError


class LoadDatasetNode(BaseNode):
    def prep(self, shared):
        return shared["args"]["data"], shared["template"]

    def exec(self, prep_res):
        directory, template = prep_res
        records = load_dataset(directory)
        if not records:
            raise FormatError(f"{directory}: dataset is empty")
        for record in records:
            if (record.n_rows, record.n_cols) != (template.n_rows, template.n_cols):
                raise FormatError(f"{directory}: record seed {record.seed} has a {record.n_rows}x{record.n_cols} "
                                  f"grid but the configuration uses {template.n_rows}x{template.n_cols}")
        return records

    def post(self, shared, prep_res, exec_res):
        shared["records"] = exec_res
        shared["samples"] = [record.to_sample() for record in exec_res]

"""Exploration by growing an abstract MDP of reliable skills on a grid game."""
from .amodel import AbstractModel, ModelParams, TransitionKey, deserialize, hoeffding_window, serialize
from .env import AbstractState, Action, ConcreteState, GridQuest, MapSpec, abstract, load_map, load_map_file, reset, step
from .manager import ExplorationGoal, Manager, ManagerParams, Plan, plan_to, score_goals
from .skills import LearnerConfig, Skill
from .worker import SkillInventory, SubtaskOutcome, Worker, WorkerParams

__all__ = [
    "AbstractModel", "ModelParams", "TransitionKey", "deserialize", "hoeffding_window", "serialize",
    "AbstractState", "Action", "ConcreteState", "GridQuest", "MapSpec", "abstract", "load_map", "load_map_file",
    "reset", "step", "ExplorationGoal", "Manager", "ManagerParams", "Plan", "plan_to", "score_goals",
    "LearnerConfig", "Skill", "SkillInventory", "SubtaskOutcome", "Worker", "WorkerParams",
]

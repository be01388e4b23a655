# Import all services for easy access
from .base_service import BaseService
from .comparison import ComparisonService
from .cycle_generator import CycleGenerator
from .cycle_prediction import PredictorTrainer
from .simulation import Simulator
from .strategies import GlobalDpController, MpcController, PowerFollowingController, Strategy

__all__ = [
    'BaseService',
    'ComparisonService',
    'CycleGenerator',
    'GlobalDpController',
    'MpcController',
    'PowerFollowingController',
    'PredictorTrainer',
    'Simulator',
    'Strategy',
]

# Service registry for the engines that construct from defaults
SERVICE_REGISTRY = {
    'comparison': ComparisonService,
    'generator': CycleGenerator,
    'simulator': Simulator,
    'trainer': PredictorTrainer,
}


def get_service(service_name: str, *args, **kwargs) -> BaseService:
    """
    Get a service instance by name.

    Args:
        service_name: Name of the service to get
        *args, **kwargs: Passed to the service constructor

    Returns:
        Service instance

    Raises:
        KeyError: If service name is not found
    """
    if service_name not in SERVICE_REGISTRY:
        raise KeyError(f"Service '{service_name}' not found in registry")

    return SERVICE_REGISTRY[service_name](*args, **kwargs)


def list_available_services() -> list:
    """Get list of available service names"""
    return list(SERVICE_REGISTRY.keys())

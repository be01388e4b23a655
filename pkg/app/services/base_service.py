from abc import ABC, abstractmethod
from typing import Any, Dict
from datetime import datetime

import structlog


class BaseService(ABC):
    """
    Base class for the stateful engines (controllers, simulator, trainers).
    """

    def __init__(self, name: str):
        self.name = name
        self.logger = structlog.get_logger(name).bind(service=name)
        self.created_at = datetime.utcnow()
        self.last_updated = datetime.utcnow()

    def log_info(self, message: str, **kwargs):
        """Log info message with service context"""
        self.logger.info(message, **kwargs)

    def log_error(self, message: str, **kwargs):
        """Log error message with service context"""
        self.logger.error(message, **kwargs)

    def log_warning(self, message: str, **kwargs):
        """Log warning message with service context"""
        self.logger.warning(message, **kwargs)

    def update_timestamp(self):
        """Update the last_updated timestamp"""
        self.last_updated = datetime.utcnow()

    def get_status(self) -> Dict[str, Any]:
        """Get basic service status"""
        return {
            "name": self.name,
            "created_at": self.created_at.isoformat(),
            "last_updated": self.last_updated.isoformat(),
        }

    @abstractmethod
    def reset(self) -> None:
        """Return the engine to its initial state"""
        pass

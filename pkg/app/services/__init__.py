# Import services to make them available
from app.services.pipeline_service import PipelineService, get_pipeline_service

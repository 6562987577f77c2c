"""
API views for the maskshift app.

This module defines the REST API endpoints for launching experiment runs
and reading their results. Runs execute synchronously inside the POST
request, so the API is meant for small desk-scale configurations; the
training size is capped by MASKSHIFT['API_MAX_TRAIN_N'].
"""

import logging

from django.http import HttpResponse
from drf_yasg.utils import swagger_auto_schema
from rest_framework import generics, status
from rest_framework.response import Response

from .exceptions import MaskShiftError
from .harness import results_csv
from .models import ExperimentRun
from .serializers import ExperimentRunListSerializer, ExperimentRunSerializer
from .services import execute_run

logger = logging.getLogger(__name__)


class RunListCreateView(generics.ListCreateAPIView):
    """
    API endpoint for listing runs and launching new ones.

    GET /api/runs
        Returns the runs, newest first, without their result rows.

        Response: 200 OK
        {
            "count": 1,
            "results": [
                {
                    "id": 1,
                    "name": "mcar baseline",
                    "kind": "experiment",
                    "status": "completed",
                    "created_at": "2026-10-17T10:30:00Z",
                    "finished_at": "2026-10-17T10:31:12Z",
                    "result_count": 9
                }
            ]
        }

    POST /api/runs
        Validates the configuration, executes the run and returns it with
        its result rows.

        Request Body:
        {
            "name": "mcar baseline",
            "kind": "experiment",
            "config": {"dim": 10, "train_n": 512, "test_levels": [0.1, 0.5], "epochs": 5}
        }

        Response: 201 Created (run with "status": "completed" and "results")

        Error Response: 400 Bad Request
        {
            "config": {"train_level": ["Invalid missing level 0.35. ..."]}
        }

        Error Response: 500 Internal Server Error
        {
            "error": "Run failed at seed 0: ...",
            "id": 2,
            "status": "failed"
        }
    """

    queryset = ExperimentRun.objects.all()

    def get_serializer_class(self):
        if self.request.method == 'GET':
            return ExperimentRunListSerializer
        return ExperimentRunSerializer

    @swagger_auto_schema(
        operation_description='List experiment runs, newest first',
        responses={
            200: ExperimentRunListSerializer(many=True),
        },
        tags=['Runs']
    )
    def get(self, request, *args, **kwargs):
        """Handle GET requests to list runs."""
        return super().get(request, *args, **kwargs)

    @swagger_auto_schema(
        operation_description="""
        Launch an experiment or ablation run and wait for its results.

        Config keys follow the ExperimentConfig fields; omitted keys keep
        their defaults and unknown keys are rejected.
        """,
        request_body=ExperimentRunSerializer,
        responses={
            201: ExperimentRunSerializer(),
            400: "Bad Request - Validation Error",
            500: "Run failed - the failure is recorded on the run"
        },
        tags=['Runs']
    )
    def post(self, request, *args, **kwargs):
        """Handle POST requests to create and execute a run."""
        serializer = self.get_serializer(data=request.data)
        serializer.is_valid(raise_exception=True)
        run = serializer.save()

        try:
            execute_run(run)
        except MaskShiftError as error:
            logger.error('Run %s failed: %s', run.pk, error)
            return Response({
                "error": str(error),
                "id": run.pk,
                "status": run.status
            }, status=status.HTTP_500_INTERNAL_SERVER_ERROR)

        run.refresh_from_db()
        return Response(self.get_serializer(run).data, status=status.HTTP_201_CREATED)


class RunDetailView(generics.RetrieveDestroyAPIView):
    """
    API endpoint for retrieving or deleting a run.

    GET /api/runs/{id}
        Returns the run with its configuration and result rows.

        Error Response: 404 Not Found
        {
            "detail": "Not found."
        }

    DELETE /api/runs/{id}
        Deletes the run and its result rows.

        Response: 204 No Content
    """

    queryset = ExperimentRun.objects.all()
    serializer_class = ExperimentRunSerializer

    @swagger_auto_schema(
        operation_description='Retrieve a run with its result rows',
        responses={
            200: ExperimentRunSerializer(),
            404: 'Not Found'
        },
        tags=['Runs']
    )
    def get(self, request, *args, **kwargs):
        """Handle GET requests to retrieve a run."""
        return super().get(request, *args, **kwargs)

    @swagger_auto_schema(
        operation_description='Delete a run and its result rows',
        responses={
            204: 'No Content - Successfully Deleted',
            404: 'Not Found'
        },
        tags=['Runs']
    )
    def delete(self, request, *args, **kwargs):
        """Handle DELETE requests to remove a run."""
        return super().delete(request, *args, **kwargs)


class RunResultsCSVView(generics.GenericAPIView):
    """
    API endpoint for downloading a run's result table.

    GET /api/runs/{id}/results.csv
        Returns text/csv with header
        mode,train_level,test_level,rmse,optimal_rmse,gap,seed,wall_time_ms
        and rows sorted by (mode, train_level, test_level, seed).
    """

    queryset = ExperimentRun.objects.all()
    serializer_class = ExperimentRunSerializer

    @swagger_auto_schema(
        operation_description='Download the result table of a run as CSV',
        responses={
            200: 'text/csv result table',
            404: 'Not Found'
        },
        tags=['Runs']
    )
    def get(self, request, *args, **kwargs):
        """Handle GET requests to export the result table."""
        run = self.get_object()
        response = HttpResponse(results_csv(run.result_table()), content_type='text/csv')
        response['Content-Disposition'] = f'attachment; filename="run-{run.pk}-results.csv"'
        return response

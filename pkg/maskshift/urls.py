"""
URL routing for the maskshift app.

This module defines the URL patterns for the experiment run endpoints.
"""

from django.urls import path

from .views import RunDetailView, RunListCreateView, RunResultsCSVView

app_name = 'maskshift'

urlpatterns = [
    # GET /api/runs - List runs
    # POST /api/runs - Launch a run and wait for its results
    path('runs', RunListCreateView.as_view(), name='run-list-create'),

    # GET /api/runs/{id} - Retrieve a run with its result rows
    # DELETE /api/runs/{id} - Delete a run
    path('runs/<int:pk>', RunDetailView.as_view(), name='run-detail'),

    # GET /api/runs/{id}/results.csv - Result table as CSV
    path('runs/<int:pk>/results.csv', RunResultsCSVView.as_view(), name='run-results-csv'),
]

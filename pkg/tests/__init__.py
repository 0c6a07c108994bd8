"""Tests de boosted-rnn-control"""

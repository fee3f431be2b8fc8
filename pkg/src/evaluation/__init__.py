"""
Evaluation harness: predictors, Acc@0.5 reports and cycle statistics.
"""
